#![allow(dead_code)]

use aqcast::domain::{GridSpec, TemporalSpec};
use aqcast::impute::{impute_frameset, IdwConfig, ImputedViews};
use aqcast::ingest::{aggregate, split_cells, temporal_split, CellSplit, STFrameSet, TemporalSplit};
use aqcast::represent::{Dataset, WindowConfig};
use aqcast::synth::{generate, SynthConfig, SynthOutput};

pub struct Fixture {
    pub synth: SynthOutput,
    pub frames: STFrameSet,
    pub views: ImputedViews,
    pub split: CellSplit,
    pub tsplit: TemporalSplit,
}

pub fn grid(n: usize) -> GridSpec {
    GridSpec {
        n_rows: n,
        n_cols: n,
        ..GridSpec::default()
    }
}

/// Synthetic readings on an `n × n` grid, aggregated, split and imputed.
pub fn fixture(n: usize, days: usize, buses: usize, holdout: usize, seed: u64) -> Fixture {
    let cfg = SynthConfig {
        n_days: days,
        n_buses: buses,
        seed,
        ..SynthConfig::default()
    };
    let g = grid(n);
    let synth = generate(&cfg, &g, &TemporalSpec::default()).unwrap();
    let frames = aggregate(&synth.readings, &g, &TemporalSpec::default()).unwrap();
    let split = split_cells(&frames).unwrap().with_random_holdout(holdout, 7).unwrap();
    let tsplit = temporal_split(&frames, 0.8).unwrap();
    let views = impute_frameset(&frames, &split, &IdwConfig::default()).unwrap();
    Fixture {
        synth,
        frames,
        views,
        split,
        tsplit,
    }
}

/// Small fixture for model tests: 5×5 grid, 12 days, 2 held-out cells.
pub fn small() -> Fixture {
    fixture(5, 12, 3, 2, 3)
}

pub fn dataset(f: &Fixture, windows: WindowConfig) -> Dataset {
    Dataset::new(&f.views, f.split.clone(), f.tsplit.clone(), windows, None).unwrap()
}

/// Short windows (in bins) so the small fixtures train quickly.
pub fn short_windows(input: usize, horizon: usize) -> WindowConfig {
    WindowConfig {
        input_bins: Some(input),
        horizon_bins: Some(horizon),
        anchor_stride: None,
    }
}
