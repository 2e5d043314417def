use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::domain::{CellId, GridSpec, TemporalSpec, TimeBin};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AQSTFS\0\0";
pub const FRAMESET_VERSION: u32 = 1;

const FLAG_OBSERVED: u8 = 1;
const FLAG_IMPUTED: u8 = 2;

/// A single (cell, bin) aggregate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub pm25: Option<f64>,
    pub pm10: Option<f64>,
    pub speed: Option<f64>,
    pub device_count: u32,
    pub reading_count: u32,
    /// At least one reading fell in this (cell, bin).
    pub observed: bool,
    /// The pollutant values were filled by imputation.
    pub imputed: bool,
}

/// Dense per-(cell, time-bin) aggregates over the whole grid and dataset span.
///
/// Storage is cell-major: entry `(c, b)` lives at `c * n_bins + b`, where `c`
/// is the row-major cell index and `b` the global bin `day * bins_per_day + slot`.
/// Absent values are kept as NaN internally and surfaced as `None`.
#[derive(Clone, Debug)]
pub struct STFrameSet {
    pub grid: GridSpec,
    pub tspec: TemporalSpec,
    pub n_days: usize,
    pm25: Vec<f64>,
    pm10: Vec<f64>,
    speed: Vec<f64>,
    device_count: Vec<u32>,
    reading_count: Vec<u32>,
    observed: Vec<bool>,
    imputed: Vec<bool>,
}

/// Exact equality; absent values compare equal to each other.
impl PartialEq for STFrameSet {
    fn eq(&self, other: &Self) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.grid == other.grid
            && self.tspec == other.tspec
            && self.n_days == other.n_days
            && same(&self.pm25, &other.pm25)
            && same(&self.pm10, &other.pm10)
            && same(&self.speed, &other.speed)
            && self.device_count == other.device_count
            && self.reading_count == other.reading_count
            && self.observed == other.observed
            && self.imputed == other.imputed
    }
}

impl STFrameSet {
    pub fn empty(grid: GridSpec, tspec: TemporalSpec, n_days: usize) -> Self {
        let n = grid.n_cells() * n_days * tspec.bins_per_day();
        STFrameSet {
            grid,
            tspec,
            n_days,
            pm25: vec![f64::NAN; n],
            pm10: vec![f64::NAN; n],
            speed: vec![f64::NAN; n],
            device_count: vec![0; n],
            reading_count: vec![0; n],
            observed: vec![false; n],
            imputed: vec![false; n],
        }
    }

    pub fn bins_per_day(&self) -> usize {
        self.tspec.bins_per_day()
    }

    pub fn n_bins(&self) -> usize {
        self.n_days * self.bins_per_day()
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.n_bins() == 0 || !self.observed.iter().any(|&o| o)
    }

    #[inline]
    fn idx(&self, cell: usize, bin: usize) -> usize {
        debug_assert!(cell < self.n_cells() && bin < self.n_bins());
        cell * self.n_bins() + bin
    }

    pub fn time_bin(&self, bin: usize) -> TimeBin {
        TimeBin::from_global(bin, self.bins_per_day())
    }

    pub fn entry(&self, cell: usize, bin: usize) -> Entry {
        let i = self.idx(cell, bin);
        let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
        Entry {
            pm25: opt(self.pm25[i]),
            pm10: opt(self.pm10[i]),
            speed: opt(self.speed[i]),
            device_count: self.device_count[i],
            reading_count: self.reading_count[i],
            observed: self.observed[i],
            imputed: self.imputed[i],
        }
    }

    pub fn entry_at(&self, cell: CellId, bin: TimeBin) -> Entry {
        self.entry(self.grid.index_of(cell), bin.global(self.bins_per_day()))
    }

    #[inline]
    pub fn observed(&self, cell: usize, bin: usize) -> bool {
        self.observed[self.idx(cell, bin)]
    }

    /// Pollutant pair, if present (observed or imputed).
    #[inline]
    pub fn pollutants(&self, cell: usize, bin: usize) -> Option<[f64; 2]> {
        let i = self.idx(cell, bin);
        if self.pm25[i].is_nan() || self.pm10[i].is_nan() {
            None
        } else {
            Some([self.pm25[i], self.pm10[i]])
        }
    }

    pub fn set_entry(&mut self, cell: usize, bin: usize, e: Entry) {
        let i = self.idx(cell, bin);
        self.pm25[i] = e.pm25.unwrap_or(f64::NAN);
        self.pm10[i] = e.pm10.unwrap_or(f64::NAN);
        self.speed[i] = e.speed.unwrap_or(f64::NAN);
        self.device_count[i] = e.device_count;
        self.reading_count[i] = e.reading_count;
        self.observed[i] = e.observed;
        self.imputed[i] = e.imputed;
    }

    pub(crate) fn fill_imputed(&mut self, cell: usize, bin: usize, value: [f64; 2]) {
        let i = self.idx(cell, bin);
        self.pm25[i] = value[0];
        self.pm10[i] = value[1];
        self.imputed[i] = true;
    }

    /// Hides a cell entirely: as if no reading had ever been taken there.
    pub(crate) fn clear_cell(&mut self, cell: usize) {
        let start = self.idx(cell, 0);
        let end = start + self.n_bins();
        self.pm25[start..end].fill(f64::NAN);
        self.pm10[start..end].fill(f64::NAN);
        self.speed[start..end].fill(f64::NAN);
        self.device_count[start..end].fill(0);
        self.reading_count[start..end].fill(0);
        self.observed[start..end].fill(false);
        self.imputed[start..end].fill(false);
    }

    pub fn observed_count(&self, cell: usize) -> usize {
        let start = self.idx(cell, 0);
        self.observed[start..start + self.n_bins()].iter().filter(|&&o| o).count()
    }

    pub fn total_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn total_readings(&self) -> u64 {
        self.reading_count.iter().map(|&c| c as u64).sum()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(MAGIC)?;
        w.u32(FRAMESET_VERSION)?;
        let g = &self.grid;
        w.f64(g.origin_lon)?;
        w.f64(g.origin_lat)?;
        w.f64(g.cell_size_m)?;
        w.f64(g.ref_lat)?;
        w.u64(g.n_rows as u64)?;
        w.u64(g.n_cols as u64)?;
        let t = &self.tspec;
        w.u32(t.bin_minutes)?;
        w.u32(t.day_start_min)?;
        w.u32(t.day_end_min)?;
        w.i32(t.utc_offset_min)?;
        w.u8(t.epoch_day.is_some() as u8)?;
        w.i64(t.epoch_day.unwrap_or(0))?;
        w.u64(self.n_days as u64)?;
        w.f64s(&self.pm25)?;
        w.f64s(&self.pm10)?;
        w.f64s(&self.speed)?;
        for &c in &self.device_count {
            w.u32(c)?;
        }
        for &c in &self.reading_count {
            w.u32(c)?;
        }
        for (&o, &im) in self.observed.iter().zip(&self.imputed) {
            w.u8(if o { FLAG_OBSERVED } else { 0 } | if im { FLAG_IMPUTED } else { 0 })?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R, label: &str) -> Result<Self> {
        let mut r = BinReader::new(r, label);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != FRAMESET_VERSION {
            return Err(r.fail(format!("unsupported frame-set version {version}")));
        }
        let grid = GridSpec {
            origin_lon: r.f64()?,
            origin_lat: r.f64()?,
            cell_size_m: r.f64()?,
            ref_lat: r.f64()?,
            n_rows: r.u64()? as usize,
            n_cols: r.u64()? as usize,
        };
        let mut tspec = TemporalSpec {
            bin_minutes: r.u32()?,
            day_start_min: r.u32()?,
            day_end_min: r.u32()?,
            utc_offset_min: r.i32()?,
            epoch_day: None,
        };
        let has_epoch = r.u8()? != 0;
        let epoch = r.i64()?;
        tspec.epoch_day = has_epoch.then_some(epoch);
        grid.validate().map_err(|e| r.fail(e.to_string()))?;
        tspec.validate().map_err(|e| r.fail(e.to_string()))?;
        let n_days = r.u64()? as usize;
        let n = grid
            .n_cells()
            .checked_mul(n_days * tspec.bins_per_day())
            .filter(|&n| n < 1 << 32)
            .ok_or_else(|| r.fail("frame-set dimensions out of range"))?;
        let pm25 = r.f64s(n)?;
        let pm10 = r.f64s(n)?;
        let speed = r.f64s(n)?;
        let device_count = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let reading_count = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut observed = Vec::with_capacity(n);
        let mut imputed = Vec::with_capacity(n);
        for _ in 0..n {
            let f = r.u8()?;
            observed.push(f & FLAG_OBSERVED != 0);
            imputed.push(f & FLAG_IMPUTED != 0);
        }
        r.expect_eof()?;
        Ok(STFrameSet {
            grid,
            tspec,
            n_days,
            pm25,
            pm10,
            speed,
            device_count,
            reading_count,
            observed,
            imputed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::read_from(BufReader::new(f), &path.display().to_string())
    }
}
