//! Synthetic bus-mounted sensing over a known pollution field.
//!
//! The dense field is
//! `truth(cell, day, slot) = base(cell) + amp·sin(2π·slot/bpd + phase(cell)) + drift(day)`
//! with `base` a sum of Gaussian bumps, `phase(cell) = π(row + col)/(rows + cols)`
//! and `drift` a global AR(1) process. PM10 is `pm10_ratio · PM2.5`. Buses
//! random-walk over adjacent cells and report the field plus Gaussian noise.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use chrono::{DateTime, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{CellId, GridSpec, RawReading, TemporalSpec};
use crate::error::{Error, Result};
use crate::ingest::{Entry, STFrameSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_days: usize,
    pub n_buses: usize,
    pub seed: u64,
    /// Distinct cells each bus visits per bin.
    pub route_length: usize,
    pub readings_per_visit: usize,
    pub base_level: f64,
    pub n_bumps: usize,
    pub bump_amplitude: f64,
    /// Bump width in cells.
    pub bump_sigma_cells: f64,
    pub daily_amplitude: f64,
    pub rho: f64,
    pub sigma_day: f64,
    pub sigma_obs: f64,
    pub pm10_ratio: f64,
    /// Local calendar date of day 0, `YYYY-MM-DD`.
    pub start_date: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_days: 30,
            n_buses: 10,
            seed: 1,
            route_length: 2,
            readings_per_visit: 3,
            base_level: 90.0,
            n_bumps: 4,
            bump_amplitude: 80.0,
            bump_sigma_cells: 2.5,
            daily_amplitude: 50.0,
            rho: 0.7,
            sigma_day: 5.0,
            sigma_obs: 5.0,
            pm10_ratio: 1.1,
            start_date: "2020-11-01".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.sigma_day >= 0.0 && self.sigma_obs >= 0.0) {
            return bad("noise scales must be ≥ 0".into());
        }
        if self.n_days == 0 || self.n_buses == 0 || self.route_length == 0 || self.readings_per_visit == 0 {
            return bad("n_days, n_buses, route_length and readings_per_visit must be positive".into());
        }
        if !(self.bump_sigma_cells > 0.0) {
            return bad("bump_sigma_cells must be positive".into());
        }
        self.epoch_day()?;
        Ok(())
    }

    fn epoch_day(&self) -> Result<i64> {
        let d = NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("synth.start_date `{}`: {e}", self.start_date)))?;
        Ok(d.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")).num_days())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub readings: Vec<RawReading>,
    /// Dense field on every (cell, bin), all entries marked observed.
    pub truth: STFrameSet,
    /// Per-cell static covariates: a noisy copy of the base level and the
    /// distance to the nearest bump center (in cells).
    pub statics: Vec<(CellId, [f64; 2])>,
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative sd")
}

/// Generates readings and the dense truth on `grid` under `tspec`; the
/// temporal spec's epoch is set from `cfg.start_date`.
pub fn generate(cfg: &SynthConfig, grid: &GridSpec, tspec: &TemporalSpec) -> Result<SynthOutput> {
    cfg.validate()?;
    grid.validate()?;
    tspec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tspec = TemporalSpec {
        epoch_day: Some(cfg.epoch_day()?),
        ..*tspec
    };
    let (rows, cols) = (grid.n_rows, grid.n_cols);
    let bpd = tspec.bins_per_day();

    let bumps: Vec<(f64, f64, f64)> = (0..cfg.n_bumps)
        .map(|_| {
            (
                rng.random_range(0.0..rows as f64),
                rng.random_range(0.0..cols as f64),
                cfg.bump_amplitude * rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let two_s2 = 2.0 * cfg.bump_sigma_cells * cfg.bump_sigma_cells;
    let base: Vec<f64> = grid
        .cells()
        .map(|c| {
            let (r, k) = (c.row as f64 + 0.5, c.col as f64 + 0.5);
            cfg.base_level
                + bumps
                    .iter()
                    .map(|&(br, bc, a)| a * (-((r - br).powi(2) + (k - bc).powi(2)) / two_s2).exp())
                    .sum::<f64>()
        })
        .collect();
    let phase: Vec<f64> = grid
        .cells()
        .map(|c| PI * (c.row + c.col) as f64 / (rows + cols) as f64)
        .collect();
    let stationary = cfg.sigma_day / (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut drift = Vec::with_capacity(cfg.n_days);
    let mut d = normal(stationary).sample(&mut rng);
    for _ in 0..cfg.n_days {
        drift.push(d);
        d = cfg.rho * d + normal(cfg.sigma_day).sample(&mut rng);
    }
    let field = |cell: usize, bin: usize| -> f64 {
        let (day, slot) = (bin / bpd, bin % bpd);
        let v = base[cell] + cfg.daily_amplitude * (TAU * slot as f64 / bpd as f64 + phase[cell]).sin() + drift[day];
        v.max(0.0)
    };

    let mut truth = STFrameSet::empty(*grid, tspec, cfg.n_days);
    for c in 0..grid.n_cells() {
        for b in 0..truth.n_bins() {
            let v = field(c, b);
            truth.set_entry(
                c,
                b,
                Entry {
                    pm25: Some(v),
                    pm10: Some(cfg.pm10_ratio * v),
                    speed: None,
                    device_count: 0,
                    reading_count: 0,
                    observed: true,
                    imputed: false,
                },
            );
        }
    }

    // buses start on distinct cells where possible
    let starts = rand::seq::index::sample(&mut rng, grid.n_cells(), cfg.n_buses.min(grid.n_cells()));
    let mut pos: Vec<CellId> = (0..cfg.n_buses)
        .map(|i| grid.cell_at(starts.index(i % starts.len())))
        .collect();
    let obs = normal(cfg.sigma_obs);
    let bin_s = tspec.bin_minutes as i64 * 60;
    let visit_s = (bin_s / cfg.route_length as i64).max(1);
    let mut readings = Vec::new();
    let mut occupied = vec![false; grid.n_cells()];
    for bin in 0..truth.n_bins() {
        let (day, slot) = (bin / bpd, bin % bpd);
        let bin_start = tspec.utc_timestamp(day, tspec.slot_start_minute(slot) as f64);
        occupied.fill(false);
        for step in 0..cfg.route_length {
            for (bus, here) in pos.iter_mut().enumerate() {
                let ci = grid.index_of(*here);
                occupied[ci] = true;
                let v = field(ci, bin);
                let t0 = bin_start + step as i64 * visit_s;
                let mut times: Vec<i64> = (0..cfg.readings_per_visit)
                    .map(|_| t0 + rng.random_range(0..visit_s))
                    .collect();
                times.sort_unstable();
                for t in times {
                    let east = (here.col as f64 + rng.random_range(0.05..0.95)) * grid.cell_size_m;
                    let north = (here.row as f64 + rng.random_range(0.05..0.95)) * grid.cell_size_m;
                    let (lon, lat) = grid.unproject(east, north);
                    readings.push(RawReading {
                        timestamp: t,
                        lon,
                        lat,
                        pm25: (v + obs.sample(&mut rng)).max(0.0),
                        pm10: (cfg.pm10_ratio * v + obs.sample(&mut rng)).max(0.0),
                        device_id: format!("bus{bus:03}"),
                    });
                }
                let nbrs = adjacent(*here, grid);
                let free: Vec<CellId> = nbrs.iter().copied().filter(|c| !occupied[grid.index_of(*c)]).collect();
                let pool = if free.is_empty() { &nbrs } else { &free };
                *here = *pool.choose(&mut rng).expect("grid cell has a neighbor");
                // reserve the next cell so two buses do not converge on it
                occupied[grid.index_of(*here)] = true;
            }
        }
    }
    readings.sort_by(|a, b| a.device_id.cmp(&b.device_id).then(a.timestamp.cmp(&b.timestamp)));

    let static_noise = normal(5.0);
    let statics = grid
        .cells()
        .enumerate()
        .map(|(i, c)| {
            let (r, k) = (c.row as f64 + 0.5, c.col as f64 + 0.5);
            let near = bumps
                .iter()
                .map(|&(br, bc, _)| ((r - br).powi(2) + (k - bc).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            (c, [base[i] + static_noise.sample(&mut rng), near])
        })
        .collect();
    Ok(SynthOutput {
        readings,
        truth,
        statics,
    })
}

fn adjacent(c: CellId, grid: &GridSpec) -> Vec<CellId> {
    let mut out = Vec::with_capacity(4);
    if c.row > 0 {
        out.push(CellId::new(c.row - 1, c.col));
    }
    if c.row + 1 < grid.n_rows {
        out.push(CellId::new(c.row + 1, c.col));
    }
    if c.col > 0 {
        out.push(CellId::new(c.row, c.col - 1));
    }
    if c.col + 1 < grid.n_cols {
        out.push(CellId::new(c.row, c.col + 1));
    }
    if out.is_empty() {
        out.push(c);
    }
    out
}

fn rfc3339(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .expect("timestamp in range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// Writes readings with the default ingest columns.
pub fn write_readings_csv<W: Write>(w: W, readings: &[RawReading]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["timestamp", "lon", "lat", "pm25", "pm10", "device_id"])?;
    for r in readings {
        out.write_record([
            rfc3339(r.timestamp),
            format!("{:.7}", r.lon),
            format!("{:.7}", r.lat),
            format!("{:.3}", r.pm25),
            format!("{:.3}", r.pm10),
            r.device_id.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the static covariates as a `row,col,f1,f2` sidecar.
pub fn write_static_csv<W: Write>(w: W, statics: &[(CellId, [f64; 2])]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row", "col", "base_proxy", "bump_distance"])?;
    for (c, v) in statics {
        out.write_record([c.row.to_string(), c.col.to_string(), format!("{:.6}", v[0]), format!("{:.6}", v[1])])?;
    }
    out.flush()?;
    Ok(())
}

/// Fraction of (cell, bin) entries with at least one reading.
pub fn coverage(frames: &STFrameSet) -> f64 {
    frames.total_observed() as f64 / (frames.n_cells() * frames.n_bins()) as f64
}
